"""Verification scripts for modguard."""
