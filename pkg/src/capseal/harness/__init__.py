"""Evaluation harness: security-outcome scenarios and same-harness latency
comparison over deterministic scripted drivers and local targets."""
