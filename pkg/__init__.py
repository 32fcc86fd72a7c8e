"""
FOCUS desk-scale experiments
Object-centric world models and object-centric exploration on a planar
manipulation simulator
"""

__version__ = "0.1.0"
__author__ = "FOCUS desk-scale contributors"
