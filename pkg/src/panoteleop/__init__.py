"""panoteleop: desk-scale panoramic teleoperation toolkit.

Simulated six-fisheye robot device, equirectangular stitching, a frame
relay with network emulation, a drive-control path, and an event-to-eye
latency measurement harness.
"""

__version__ = "0.1.0"
