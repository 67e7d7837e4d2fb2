"""Relational forward models for multi-agent gridworlds.

Graph-network sequence models that predict what each agent in a shared
gridworld will do next (or how much return it will collect), the games
and scripted players used to generate training data, analysis routines
that read social structure out of the trained models' edge messages,
and a model-augmented actor-critic agent.
"""

__version__ = "0.1.0"
