"""Few-shot visual relationship co-localization."""
