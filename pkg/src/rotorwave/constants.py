"""Physical constants and unit conversions.

Every conversion in the package goes through this table. Units used
throughout: energies in cm^-1, times in ps, fields in MV/cm, dipoles in
Debye, temperatures in K.
"""

import math

CONSTANTS_VERSION = "codata2018-1"

# SI values (CODATA 2018, exact where defined)
SPEED_OF_LIGHT_SI = 299_792_458.0  # m/s
PLANCK_SI = 6.626_070_15e-34  # J s
BOLTZMANN_SI = 1.380_649e-23  # J/K
EPSILON0_SI = 8.854_187_8128e-12  # F/m
DEBYE_SI = 1e-21 / SPEED_OF_LIGHT_SI  # C m

# speed of light in cm/ps
SPEED_OF_LIGHT = 0.029_979_2458
# angular frequency (rad/ps) per cm^-1
TWO_PI_C = 2.0 * math.pi * SPEED_OF_LIGHT

# Boltzmann constant in cm^-1 / K
K_BOLTZMANN = 0.695_034_800

# 1 Debye * 1 MV/cm expressed in cm^-1
DEBYE_MV_PER_CM_TO_CM1 = DEBYE_SI * 1e8 / (PLANCK_SI * SPEED_OF_LIGHT_SI * 100.0)


def kT(temperature):
    """Thermal energy k_B T in cm^-1."""
    return K_BOLTZMANN * temperature


def intensity_to_field(intensity):
    """Peak field (MV/cm) of a linearly polarized pulse with peak intensity in W/cm^2."""
    if intensity < 0:
        raise ValueError("intensity must be non-negative")
    i_si = intensity * 1e4  # W/m^2
    e_si = math.sqrt(2.0 * i_si / (EPSILON0_SI * SPEED_OF_LIGHT_SI))  # V/m
    return e_si / 1e8


def coupling_strength(mu, field):
    """Dipole interaction energy mu*E in cm^-1 for mu in Debye and E in MV/cm."""
    return mu * field * DEBYE_MV_PER_CM_TO_CM1


def table():
    """Snapshot of the constants, written into run manifests."""
    return {
        "version": CONSTANTS_VERSION,
        "speed_of_light_cm_per_ps": SPEED_OF_LIGHT,
        "k_boltzmann_cm1_per_K": K_BOLTZMANN,
        "debye_mv_per_cm_to_cm1": DEBYE_MV_PER_CM_TO_CM1,
        "epsilon0_si": EPSILON0_SI,
    }
