"""Tests for sebcomm"""
