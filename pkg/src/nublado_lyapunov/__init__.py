"""
Damped Hamiltonian chains of rotators and oscillators, their explicit strict
Lyapunov functions, and the energy-dissipation experiments built on them.
"""

__version__ = "0.1.0"
