"""Plain-loop convolutional network used as an independent oracle.

Everything here is written directly from the layer definitions with
quadruple loops — no shared code with the package under test. A first-order
generative layer must match this bit-for-bit (well, to 1e-12) in forward
maps, sensitivities, gradients, and post-update weights.
"""

import math

import numpy as np


def act(aid, x):
    if aid == "tanh":
        return np.tanh(x)
    out = np.clip(x, -1.0, 1.0)
    return out


def act_dx(aid, x):
    if aid == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    return np.where(np.abs(x) < 1.0, 1.0, 0.0)


def corr_valid(x, k):
    kx, ky = k.shape
    oh, ow = x.shape[0] - kx + 1, x.shape[1] - ky + 1
    out = np.zeros((oh, ow))
    for m in range(oh):
        for n in range(ow):
            s = 0.0
            for r in range(kx):
                for t in range(ky):
                    s += k[r, t] * x[m + r, n + t]
            out[m, n] = s
    return out


def down_avg(y, fx, fy):
    oh, ow = y.shape[0] // fx, y.shape[1] // fy
    out = np.zeros((oh, ow))
    for m in range(oh):
        for n in range(ow):
            block = y[m * fx : (m + 1) * fx, n * fy : (n + 1) * fy]
            # anchored mean, same float ordering as the package
            anchor = block[0, 0]
            out[m, n] = anchor + np.mean(block - anchor)
    return out


def up_hold(y, fx, fy):
    out = np.zeros((y.shape[0] * fx, y.shape[1] * fy))
    for m in range(out.shape[0]):
        for n in range(out.shape[1]):
            out[m, n] = y[m // fx, n // fy]
    return out


class RefLayer:
    def __init__(self, weights, biases, activation="tanh", sampling=("none", 1, 1)):
        self.w = np.array(weights, dtype=np.float64)  # (n_out, n_in, kx, ky)
        self.b = np.array(biases, dtype=np.float64)
        self.activation = activation
        self.sampling = sampling


class RefCNN:
    """Stack of RefLayers with cached forward state for backprop."""

    def __init__(self, layers):
        self.layers = layers

    def forward(self, maps):
        maps = np.asarray(maps, dtype=np.float64)
        if maps.ndim == 2:
            maps = maps[None]
        self.cache = []
        for layer in self.layers:
            n_out = layer.w.shape[0]
            xs = []
            for i in range(n_out):
                x = np.full(
                    (maps.shape[1] - layer.w.shape[2] + 1,
                     maps.shape[2] - layer.w.shape[3] + 1),
                    layer.b[i],
                )
                for k in range(maps.shape[0]):
                    x = x + corr_valid(maps[k], layer.w[i, k])
                xs.append(x)
            x = np.stack(xs)
            y = act(layer.activation, x)
            mode, fx, fy = layer.sampling
            if mode == "down":
                y = np.stack([down_avg(m, fx, fy) for m in y])
            elif mode == "up":
                y = np.stack([up_hold(m, fx, fy) for m in y])
            self.cache.append((maps, x, y))
            maps = y
        return maps

    def backward(self, target):
        """Returns (loss, [(dW, db) per layer], [delta per layer])."""
        maps_in, x, y = self.cache[-1]
        target = np.asarray(target, dtype=np.float64)
        if target.ndim == 2:
            target = target[None]
        err = y - target
        loss = float(np.mean(err * err))
        d_out = (2.0 / y.size) * err

        grads, deltas = [None] * len(self.layers), [None] * len(self.layers)
        # dE/dy of each hidden layer, filled as the sweep walks back
        self.d_outs = [None] * (len(self.layers) - 1)
        for li in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[li]
            maps_in, x, y = self.cache[li]
            mode, fx, fy = layer.sampling
            if mode == "down":
                d_act = np.stack([up_hold(m, fx, fy) for m in d_out]) / (fx * fy)
            elif mode == "up":
                d_act = np.stack([down_avg(m, fx, fy) for m in d_out]) * (fx * fy)
            else:
                d_act = d_out
            d_x = d_act * act_dx(layer.activation, x)
            deltas[li] = d_x

            dw = np.zeros_like(layer.w)
            db = np.zeros_like(layer.b)
            n_out, n_in, kx, ky = layer.w.shape
            for i in range(n_out):
                db[i] = float(np.sum(d_x[i]))
                for k in range(n_in):
                    for r in range(kx):
                        for t in range(ky):
                            acc = 0.0
                            for m in range(d_x.shape[1]):
                                for n in range(d_x.shape[2]):
                                    acc += d_x[i, m, n] * maps_in[k, m + r, n + t]
                            dw[i, k, r, t] = acc
            grads[li] = (dw, db)

            if li > 0:
                d_out = np.zeros_like(maps_in)
                for k in range(n_in):
                    for u in range(maps_in.shape[1]):
                        for v in range(maps_in.shape[2]):
                            acc = 0.0
                            for i in range(n_out):
                                for r in range(kx):
                                    for t in range(ky):
                                        dm, dn = u - r, v - t
                                        if (0 <= dm < d_x.shape[1]
                                                and 0 <= dn < d_x.shape[2]):
                                            acc += d_x[i, dm, dn] * layer.w[i, k, r, t]
                            d_out[k, u, v] = acc
                self.d_outs[li - 1] = d_out
        return loss, grads, deltas

    def sgd(self, grads, lr):
        for layer, (dw, db) in zip(self.layers, grads):
            layer.w -= lr * dw
            layer.b -= lr * db


def from_first_order(network):
    """Build a RefCNN mirroring a first-order generative network.

    Takes the q=1 slice of each weight tensor; the caller must ensure every
    layer really is first order (Q == 1, kernel-wise multiply, sum pool).
    """
    layers = []
    for spec, p in zip(network.specs, network.params):
        assert spec.q_order == 1
        assert spec.operators.pool == "sum"
        mode = spec.sampling.mode
        fx, fy = spec.sampling.factors
        layers.append(
            RefLayer(p.weights[..., 0], p.biases,
                     activation=spec.operators.activation,
                     sampling=(mode, fx, fy))
        )
    return RefCNN(layers)
