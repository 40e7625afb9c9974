"""Multi-head federated learning simulator for time-series prediction.

Each client (domain) owns one small binary "head" network per input feature
plus one prediction network. Heads are the unit of federated sharing: clients
publish head snapshots with force-vector embeddings to a central source pool,
select similar heads from other clients by embedding distance, and blend the
selected weights into their own heads.
"""

__version__ = "0.1.0"
