"""
Test package for the splatting pipeline.

Tests use unittest only. Long end-to-end runs are skipped unless
CASCADE_SPLAT_SLOW=1 is set in the environment.
"""
