"""Feedforward tanh network over a flat parameter vector.

Forward, forward-mode (jvp) and reverse-mode (vjp) products are written out
by hand so that policy gradients and Fisher-vector products stay exact in
float64.
"""

from __future__ import annotations

import numpy as np


class MLP:
    def __init__(self, sizes, rng=None, out_scale: float = 1.0):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        self._slices = []
        offset = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = slice(offset, offset + n_in * n_out)
            offset += n_in * n_out
            b = slice(offset, offset + n_out)
            offset += n_out
            self._slices.append((w, b, n_in, n_out))
        self.n_params = offset
        self.params = np.zeros(self.n_params)
        if rng is not None:
            self.init(rng, out_scale)

    def init(self, rng: np.random.Generator, out_scale: float = 1.0):
        p = np.zeros(self.n_params)
        last = len(self._slices) - 1
        for i, (w, _, n_in, n_out) in enumerate(self._slices):
            scale = np.sqrt(1.0 / n_in) * (out_scale if i == last else 1.0)
            p[w] = rng.normal(0.0, scale, size=n_in * n_out)
        self.params = p
        return self

    def _layers(self, params):
        for w, b, n_in, n_out in self._slices:
            yield params[w].reshape(n_in, n_out), params[b]

    def forward(self, X, params=None):
        """Return (output, cache). ``cache`` holds layer inputs for jvp/vjp."""
        params = self.params if params is None else params
        hs = [X]
        layers = list(self._layers(params))
        h = X
        for i, (W, b) in enumerate(layers):
            a = h @ W + b
            h = np.tanh(a) if i < len(layers) - 1 else a
            hs.append(h)
        return h, (params, hs)

    def __call__(self, X, params=None):
        return self.forward(X, params)[0]

    def jvp(self, cache, dparams):
        params, hs = cache
        layers = list(self._layers(params))
        dlayers = list(self._layers(dparams))
        dh = np.zeros_like(hs[0])
        for i, ((W, _), (dW, db)) in enumerate(zip(layers, dlayers)):
            da = dh @ W + hs[i] @ dW + db
            dh = (1.0 - hs[i + 1] ** 2) * da if i < len(layers) - 1 else da
        return dh

    def vjp(self, cache, dout):
        params, hs = cache
        layers = list(self._layers(params))
        grad = np.zeros(self.n_params)
        g = dout
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            w, b, _, _ = self._slices[i]
            grad[w] = (hs[i].T @ g).ravel()
            grad[b] = g.sum(axis=0)
            if i > 0:
                g = (g @ W.T) * (1.0 - hs[i] ** 2)
        return grad
