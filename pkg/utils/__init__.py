"""Utility package: lookup tables, numeric helpers, errors"""
