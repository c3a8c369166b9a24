"""
Utility modules for file formats, guidance sources, timing, and configuration.
"""
