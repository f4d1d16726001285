"""Configuration, stage runners, checkpointing and reporting."""
