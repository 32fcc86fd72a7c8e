"""Simulator, world models, exploration, agent, training and reports"""
