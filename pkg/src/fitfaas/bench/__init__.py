"""Benchmark harness for serial and distributed pallet runs."""
