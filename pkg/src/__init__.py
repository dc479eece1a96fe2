"""User-space kernel extension host package."""
