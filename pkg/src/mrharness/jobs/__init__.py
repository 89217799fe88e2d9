"""Bundled benchmark jobs expressed as mutable expression trees."""
