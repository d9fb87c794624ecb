"""Independent reference implementations the tests check against.

Everything here is written from first principles with a different
structure than the package code (linear-power Friis instead of dB
sums, whole-sum carry folding instead of incremental, brute-force
enumeration instead of sampling), so shared bugs are unlikely.
"""

import itertools
import math

SPEED_OF_LIGHT = 299_792_458.0


def checksum_oracle(data: bytes) -> int:
    """Ones'-complement byte sum: add everything, then fold carries."""
    total = 0
    for b in data:
        total += b
    while total > 0xFFFF:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def incident_oracle(
    distance_m: float,
    angle_deg: float,
    *,
    tx_dbm: float = 30.0,
    antenna_gain_dbi: float = 8.0,
    tag_gain_dbi: float = 2.0,
    frequency_hz: float = 915e6,
    polarization_db: float = 3.0,
    boundary_m: float = 0.15,
    near_penalty_db: float = 14.0,
    coupling_db_per_neighbor: float = 2.0,
    neighbors: int = 0,
    floor_dbm: float = -90.0,
) -> float:
    """Forward link power via linear-domain Friis."""
    wavelength = SPEED_OF_LIGHT / frequency_hz
    p_tx_mw = 10.0 ** (tx_dbm / 10.0)
    g_ant = 10.0 ** (antenna_gain_dbi / 10.0)
    g_tag = 10.0 ** (tag_gain_dbi / 10.0)
    spreading = (wavelength / (4.0 * math.pi * distance_m)) ** 2
    cos2 = math.cos(math.radians(angle_deg)) ** 2
    fixed_losses_db = polarization_db + coupling_db_per_neighbor * neighbors
    if distance_m < boundary_m:
        fixed_losses_db += near_penalty_db
    p_mw = p_tx_mw * g_ant * g_tag * spreading * cos2 * 10.0 ** (-fixed_losses_db / 10.0)
    if p_mw <= 0.0:
        return floor_dbm
    return max(10.0 * math.log10(p_mw), floor_dbm)


def rssi_oracle(
    distance_m: float,
    angle_deg: float,
    *,
    tx_dbm: float = 30.0,
    antenna_gain_dbi: float = 8.0,
    tag_gain_dbi: float = 2.0,
    frequency_hz: float = 915e6,
    polarization_db: float = 3.0,
    boundary_m: float = 0.15,
    near_penalty_db: float = 14.0,
    coupling_db_per_neighbor: float = 2.0,
    backscatter_loss_db: float = 30.0,
    ambient_db: float = 0.0,
    neighbors: int = 0,
    floor_dbm: float = -90.0,
) -> float:
    """Two-traversal RSSI via linear-domain Friis, from scratch.

    Forward: tx, both gains, spreading, cos^2, polarization, near-field,
    coupling.  Return: conversion loss, then spreading, cos^2,
    polarization and near-field again, antenna gain once more, ambient
    offset.  The coupling penalty rides only the forward traversal.
    """
    incident = incident_oracle(
        distance_m,
        angle_deg,
        tx_dbm=tx_dbm,
        antenna_gain_dbi=antenna_gain_dbi,
        tag_gain_dbi=tag_gain_dbi,
        frequency_hz=frequency_hz,
        polarization_db=polarization_db,
        boundary_m=boundary_m,
        near_penalty_db=near_penalty_db,
        coupling_db_per_neighbor=coupling_db_per_neighbor,
        neighbors=neighbors,
        floor_dbm=floor_dbm,
    )
    if incident <= floor_dbm:
        return floor_dbm
    wavelength = SPEED_OF_LIGHT / frequency_hz
    spreading = (wavelength / (4.0 * math.pi * distance_m)) ** 2
    cos2 = math.cos(math.radians(angle_deg)) ** 2
    if cos2 <= 0.0:
        return floor_dbm
    back_mw = (
        10.0 ** ((incident - backscatter_loss_db) / 10.0)
        * 10.0 ** (antenna_gain_dbi / 10.0)
        * spreading
        * cos2
        * 10.0 ** (-polarization_db / 10.0)
    )
    if distance_m < boundary_m:
        back_mw *= 10.0 ** (-near_penalty_db / 10.0)
    return max(10.0 * math.log10(back_mw) - ambient_db, floor_dbm)


def logistic_oracle(rssi_dbm: float, midpoint_dbm: float, slope_db: float) -> float:
    return 1.0 / (1.0 + math.exp(-(rssi_dbm - midpoint_dbm) / slope_db))


def singulation_distribution(
    n_slots: int, probabilities: list[float]
) -> dict[int, float]:
    """Exact distribution of singulations per round by brute force.

    Enumerates every (slot assignment, decode outcome) combination:
    each tag picks a slot uniformly, then independently decodes with
    its probability; a slot with exactly one decoded reply singulates.
    """
    n = len(probabilities)
    dist: dict[int, float] = {}
    for assignment in itertools.product(range(n_slots), repeat=n):
        for decodes in itertools.product((0, 1), repeat=n):
            weight = (1.0 / n_slots) ** n
            for p, d in zip(probabilities, decodes):
                weight *= p if d else (1.0 - p)
            singulated = 0
            for slot in range(n_slots):
                decoded_here = sum(
                    1
                    for tag_index in range(n)
                    if assignment[tag_index] == slot and decodes[tag_index]
                )
                if decoded_here == 1:
                    singulated += 1
            dist[singulated] = dist.get(singulated, 0.0) + weight
    return dist


def total_variation(a: dict[int, float], b: dict[int, float]) -> float:
    keys = set(a) | set(b)
    return 0.5 * sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)
