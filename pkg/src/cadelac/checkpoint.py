"""JSON checkpoint bundling the residual networks, the encoder and its normalization."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from cadelac.delan import NetworkParams
from cadelac.encoder import LstmParams


@dataclass
class Checkpoint:
    delan: NetworkParams
    encoder: LstmParams
    n_history: int = 15
    manifest: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, n, cfg=None, n_history=15):
        from cadelac.delan import DelanConfig
        cfg = cfg or DelanConfig()
        return cls(NetworkParams.zeros(n, cfg), LstmParams.zeros(3 * n, latent_dim=cfg.latent_dim), n_history)

    def to_dict(self):
        return {"format": "cadelac-checkpoint/1", "n_history": self.n_history, "delan": self.delan.to_dict(),
                "encoder": self.encoder.to_dict(), "manifest": self.manifest}

    @classmethod
    def from_dict(cls, d):
        return cls(NetworkParams.from_dict(d["delan"]), LstmParams.from_dict(d["encoder"]), int(d["n_history"]),
                   d.get("manifest", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
