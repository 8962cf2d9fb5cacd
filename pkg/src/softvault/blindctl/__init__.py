"""Operator CLI: drive the protocols, inspect audit logs, run benchmarks."""
