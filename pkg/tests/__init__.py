"""Test package for hci-coda."""
