"""Worker modules for the modguard pipeline."""
