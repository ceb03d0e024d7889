"""
The SAMIRO numerical library.

``tensor`` is the autograd engine everything else is written in; ``nn``,
``losses``, ``synth``, ``metrics``, ``training`` and ``gradcheck`` build the
lane model, its regularisers, the data, the scores and the runs on top of it.
"""

__version__ = "1.0.0"
