"""Deterministic simulator for hierarchical shaping and transport of robot swarms.

A swarm of simple "worker" robots holds formation through pairwise potential
forces while a handful of "guide" robots allocates stations around the cluster,
carves it into a named shape, and transports it to waypoints. Coordination is
fully decentralized: a gossip-replicated key-value store, barrier
synchronization, and consensus task allocation, all running on a fixed-timestep
single-integrator engine.
"""

from swarmherd.geometry import Vec2, RobotId, Role

__all__ = ["Vec2", "RobotId", "Role"]
__version__ = "0.1.0"
