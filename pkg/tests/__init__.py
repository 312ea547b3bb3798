"""hvae test suite"""
