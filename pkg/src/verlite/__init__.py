"""Variable experience rollouts for batched on-policy RL."""
