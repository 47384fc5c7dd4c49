"""Configuration, command line and experiment orchestration."""
