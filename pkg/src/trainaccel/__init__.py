"""Training-loop acceleration micro-framework."""
