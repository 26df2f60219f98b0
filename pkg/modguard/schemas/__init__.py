"""Pydantic schemas for modguard configuration and results."""
