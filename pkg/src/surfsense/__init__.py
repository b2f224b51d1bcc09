"""Contact-surface sensing pipeline.

Turns an IMU sample stream into capture triggers, gates microscopic
surface images on sharpness, classifies object and material with a tiny
dual-head CNN, validates the (object, material) pair against the
household mapping table, and keeps the model current with an
experience-replay continual-learning loop.
"""

__version__ = "0.1.0"
