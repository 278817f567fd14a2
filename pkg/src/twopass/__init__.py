"""Desk-scale two-pass transducer with staged teacher-student compression."""

__version__ = "0.1.0"
