"""Generative adversarial perturbations."""
