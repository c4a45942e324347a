"""Fisher-based selective dampening unlearning for small networks."""
