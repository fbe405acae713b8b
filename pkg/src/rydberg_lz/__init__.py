"""Absolute gas density from dipole-dipole Landau-Zener pair transitions.

Modules:
    physics      transition probabilities and their nearest-neighbour average
    numerics     K-integral, adaptive quadrature, Levenberg-Marquardt
    simulator    synthetic shots with known ground truth
    calibration  conversion models, np-signal prediction, fits, F-test
    noise        Polya analysis of conversion-function fluctuations
    cli          command-line front end
"""

__version__ = "0.1.0"
