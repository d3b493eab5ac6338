"""Threat modeling engine for cyber-physical system architectures.

Pipeline stages: STRIDE threat generation from data-flow diagrams, mapping
of data flows to MITRE ATT&CK techniques (retrieval pipeline, in-context
prompting, or an external classifier), and asset-centric attack-path
analysis with technique-annotated reports.
"""

__version__ = "0.1.0"
