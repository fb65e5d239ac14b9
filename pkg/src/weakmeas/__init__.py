"""Conditional dynamics of multimode bosons under weak global measurement.

Four levels of description of a cavity-monitored lattice gas:

* :mod:`weakmeas.trajectory` -- exact quantum trajectories in the mode-reduced
  subspace, with a full-lattice brute-force oracle.
* :mod:`weakmeas.gaussian` -- semiclassical Gaussian wave-packet model for
  odd-site probing.
* :mod:`weakmeas.sme` -- stochastic master equation for finite detector
  efficiency.
* :mod:`weakmeas.moments` -- Gaussian-closed stochastic equations for the
  collective moments.
"""

__version__ = "0.1.0"
