import numpy as np

from nnarx.model import FfnnParams, Layer, NnarxModel


def random_params(rng, N=2, m=1, p=1, widths=(3,), activation="tanh", scale=0.5):
    n = (m + p) * N
    layers, fan_in = [], n
    for w in widths:
        layers.append(Layer(rng.normal(0, scale, (w, m)), rng.normal(0, scale, (w, fan_in)),
                            rng.normal(0, scale, w), activation))
        fan_in = w
    return FfnnParams(tuple(layers), rng.normal(0, scale, (p, fan_in)), rng.normal(0, scale, p))


def random_model(rng, N=2, m=1, p=1, widths=(3,), activation="tanh", scale=0.5):
    return NnarxModel(random_params(rng, N, m, p, widths, activation, scale), N)


def single_layer(U0, U1, W1=None, b1=None, b0=None, activation="tanh"):
    U0 = np.atleast_2d(np.asarray(U0, dtype=float))
    U1 = np.atleast_2d(np.asarray(U1, dtype=float))
    h = U1.shape[0]
    W1 = np.zeros((h, 1)) if W1 is None else np.asarray(W1, dtype=float)
    b1 = np.zeros(h) if b1 is None else b1
    b0 = np.zeros(U0.shape[0]) if b0 is None else b0
    return FfnnParams((Layer(W1, U1, b1, activation),), U0, b0)


def norm_profile_model(a, b, N=4, h=10, n_state=8):
    """Single-layer tanh model with ||U_0|| = a and ||U_1|| = b."""
    U1 = np.zeros((h, n_state))
    U1[0, 0] = b
    U0 = np.zeros((1, h))
    U0[0, 0] = a
    return NnarxModel(single_layer(U0, U1), N)
