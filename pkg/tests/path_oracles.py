"""High-precision reference for single-bounce path geometry."""

from __future__ import annotations

import math
from decimal import Decimal, localcontext


def two_segment_oracle(tx, rx, s, c=3e8):
    """Excess delay [s] at 50 significant digits, then aod and aoa [deg]."""
    with localcontext() as ctx:
        ctx.prec = 50

        def dist(p, q):
            return sum((Decimal(a) - Decimal(b)) ** 2 for a, b in zip(p, q)).sqrt()

        excess = (dist(s, tx) + dist(s, rx) - dist(tx, rx)) / Decimal(c)
    return (max(float(excess), 0.0),
            math.degrees(math.atan2(s[1] - tx[1], s[0] - tx[0])),
            math.degrees(math.atan2(s[1] - rx[1], s[0] - rx[0])))
