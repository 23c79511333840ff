"""Online calibration of time-varying OD demand against live sensor counts.

A constrained extended Kalman filter estimates deviations of OD flows from
their historical profile, with the state stacked over several intervals so
delayed measurements still reach past demand. Jacobians of the bundled
mesoscopic simulator come from central finite differences, optionally
partitioned by graph coloring so non-conflicting parameters share a
simulator run.
"""

__version__ = "0.1.0"
