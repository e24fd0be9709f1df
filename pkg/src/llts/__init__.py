"""Desk-scale low-light traffic-sign detection toolkit.

Subpackages: tensorops (autodiff core), pgfe (enhancement front end),
mfia/hrfm (attention fusion neck), detector (model, loss, training),
datakit (synthetic corpus + degradation), evalkit (detection metrics),
cli (operator commands).
"""

__version__ = "0.1.0"
