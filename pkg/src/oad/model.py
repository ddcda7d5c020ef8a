"""Model parameters: shared FC trunk, proposal scorer, recurrent recognizer heads.

One flat registry of named Parameters keeps the optimizer, checkpoints and
gradient checks simple. The trunk output feeds both the offline proposal
branch and the online recognizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Parameter, relu


@dataclass
class ModelDims:
    feature_dim: int          # raw feature width (file payload)
    trunk_dim: int            # shared FC output width
    hidden: int               # recurrent state width
    classes: int              # positive action classes (background excluded)


class Model:
    """Holds every trainable Parameter and the forward helpers they share.

    Parameters:
      trunk_w (D_in x D), trunk_b (D)        shared FC + ReLU
      score_w (D x C)                        frame score projection
      rnn_wx (D x 4H), rnn_wh (H x 4H), rnn_b (4H)   LSTM cell (gate order i,f,g,o)
      act_w (H x (C+1)), start_w (H x 2)     classification heads
    With no_rnn the cell is replaced by two ReLU layers:
      ff1_w (D x H), ff1_b (H), ff2_w (H x H), ff2_b (H)
    """

    def __init__(self, dims: ModelDims, rng: np.random.Generator, no_rnn: bool = False):
        self.dims = dims
        self.no_rnn = no_rnn
        d_in, d, h, c = dims.feature_dim, dims.trunk_dim, dims.hidden, dims.classes

        def uniform(name, shape, fan_in):
            lim = 1.0 / np.sqrt(fan_in)
            return Parameter(name, rng.uniform(-lim, lim, size=shape))

        self.params: dict[str, Parameter] = {}
        self._add(uniform("trunk_w", (d_in, d), d_in))
        self._add(Parameter("trunk_b", np.zeros(d)))
        self._add(uniform("score_w", (d, c), d))
        if no_rnn:
            self._add(uniform("ff1_w", (d, h), d))
            self._add(Parameter("ff1_b", np.zeros(h)))
            self._add(uniform("ff2_w", (h, h), h))
            self._add(Parameter("ff2_b", np.zeros(h)))
        else:
            self._add(uniform("rnn_wx", (d, 4 * h), h))
            self._add(uniform("rnn_wh", (h, 4 * h), h))
            b = np.zeros(4 * h)
            b[h:2 * h] = 1.0  # forget-gate bias, helps small-scale convergence
            self._add(Parameter("rnn_b", b))
        self._add(uniform("act_w", (h, c + 1), h))
        self._add(uniform("start_w", (h, 2), h))

    def _add(self, p: Parameter) -> None:
        self.params[p.name] = p

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- shared trunk -------------------------------------------------------

    def trunk_forward(self, raw: np.ndarray):
        """F = relu(raw @ W + b). Returns (F, cache for backward)."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim == 1:
            raw = raw[None, :]
        if raw.shape[1] != self.dims.feature_dim:
            raise ValueError(
                f"trunk expects width {self.dims.feature_dim}, got {raw.shape[1]}")
        pre = raw @ self["trunk_w"].value + self["trunk_b"].value
        feat = relu(pre)
        return feat, (raw, pre > 0)

    def trunk_backward(self, dfeat: np.ndarray, cache) -> None:
        raw, mask = cache
        dpre = dfeat * mask
        self["trunk_w"].grad += raw.T @ dpre
        self["trunk_b"].grad += dpre.sum(axis=0)

    def state_hash(self) -> str:
        """Order-stable digest of all parameter values."""
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].value).tobytes())
        return h.hexdigest()
