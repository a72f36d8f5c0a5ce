"""HTTP service wrapping the core package."""
