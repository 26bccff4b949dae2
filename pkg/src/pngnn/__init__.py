"""Conditional message-passing link prediction with path-neighbor aggregation.

The package has two halves that check each other:

* a trainable engine: pairwise-conditioned message passing over a knowledge
  graph (``cgnn``), optionally fused with pooled path-neighbor strata
  (``pn``), trained and evaluated by ``training``;
* an executable expressivity verifier: a counting-modal-logic model checker
  (``logic``), a compiler from formulas to exact GNN weights (``compiler``),
  and a synthetic rule-structure benchmark generator (``synth``).

``autodiff`` is the shared numeric substrate; ``cli`` exposes everything as
subcommands.
"""

__version__ = "0.1.0"
