"""Multi-label technique classifier trained on expert-labeled data flows.

Fine-tunes a text encoder with a sigmoid classification head, selects the
best of k cross-validation folds by F1, and exports per-flow score vectors
in the predictions JSON-lines format the threat-modeling CLI consumes.
"""

__version__ = "0.1.0"
