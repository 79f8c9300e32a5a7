"""Edge-offloading simulator and hybrid-decision multi-agent actor-critic trainer.

Modules:
    config    -- dataclass configuration, presets, JSON/env-var loading
    simcore   -- environment physics and the slot-advance state machine
    coselect  -- capacity-constrained user/server co-selection matching
    hybrid    -- state encoding, action mapping, server-side refinement
    tinynet   -- dense MLPs with analytic backprop, Adam, soft target updates
    replay    -- experience buffer with reward/TD-error composite priorities
    trainer   -- multi-agent actor-critic training loop and benchmark policies
    harness   -- experiment drivers, smoothing, aggregation, manifests
    cli       -- command-line entry point
"""

__version__ = "0.1.0"
