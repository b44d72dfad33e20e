"""netcompose: SDN application composition over a simulated data plane.

Multiple client-controller backends host application modules; a Core
distributes network events to them over an intermediate wire protocol,
enforces fence-based run-to-completion, merges module outputs under
sequential/parallel semantics with conflict-resolution policies, and
drives a deterministic OpenFlow-like simulated network.
"""

__version__ = "0.1.0"
