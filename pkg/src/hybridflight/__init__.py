"""Flight-control workbench: 6-DOF simulator, sliding-mode and hybrid control, PPO."""

__version__ = "0.1.0"
