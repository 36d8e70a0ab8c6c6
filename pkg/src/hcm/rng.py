"""Named random sub-streams.

Every random draw in the pipeline comes from a generator derived from the
master seed plus a tuple of labels (module tag, entity ids, band index).
The child seed is the first 16 bytes of a SHA-256 digest over the labels, so
adding or removing one entity never shifts the randomness of the others.

Tags in use:

=================================  ==========================================
``geometry``                       random playground
``nodes/<group>``                  placement of one population group
``trajectory/<node>``              road walk / heading of one node
``lsp/<tx>/<scenario>/<P>/<C>``    one LSP field (band index appended)
``clusters/<link>/<draw>``         one static cluster draw (band appended)
``dynamic/<link>/<scatterer>``     sub-path phases of a dynamic cluster
=================================  ==========================================
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream", "substream_id", "child_seed"]


def substream_id(*labels: object) -> str:
    return "/".join(str(label) for label in labels)


def child_seed(seed: int, *labels: object) -> int:
    text = f"{int(seed)}|" + substream_id(*labels)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:16], "little")


def substream(seed: int, *labels: object) -> np.random.Generator:
    """Return an independent PCG64 generator for ``labels`` under ``seed``."""
    return np.random.Generator(np.random.PCG64(child_seed(seed, *labels)))
