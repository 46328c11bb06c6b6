"""Dual-expert consistency distillation at desk scale."""
