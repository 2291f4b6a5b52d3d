"""Physical constants and unit conversions used across the simulator."""

import numpy as np

SPEED_OF_LIGHT = 2.99792458e8   # m/s
EARTH_RADIUS = 6371e3           # m
GM_EARTH = 3.986004418e14       # m^3/s^2
LN2 = float(np.log(2.0))


def db_to_linear(x_db):
    return 10.0 ** (np.asarray(x_db, dtype=float) / 10.0)


def linear_to_db(x_lin):
    return 10.0 * np.log10(np.maximum(np.asarray(x_lin, dtype=float), 1e-300))


def dbm_to_watt(x_dbm):
    return 10.0 ** ((np.asarray(x_dbm, dtype=float) - 30.0) / 10.0)


def watt_to_dbm(x_w):
    return linear_to_db(x_w) + 30.0


def nats_to_bits(x):
    return np.asarray(x, dtype=float) / LN2


def bits_to_nats(x):
    return np.asarray(x, dtype=float) * LN2
