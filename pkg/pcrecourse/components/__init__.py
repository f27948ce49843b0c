"""Constant tables: pipeline defaults and report styles."""
