"""Age-of-information scheduling over ARQ/HARQ links."""
