import numpy as np
import pytest

from panoteleop.calibration import default_rig
from panoteleop.client import ClientSession
from panoteleop.device import DeviceSim
from panoteleop.relay import RelayServer
from panoteleop.scene import SceneEnvironment, synthetic_environment
from panoteleop.stitching import build_stitch_map

# Desk-scale defaults: the watermark block's fixed pixel footprint wants
# the full 1024x512 panorama; cameras stay small to keep frames cheap.
TEST_PANO_W, TEST_PANO_H = 1024, 512
_RIG = default_rig(width=160, height=160, f_px_per_rad=72.0)
_SMAP = build_stitch_map(_RIG, TEST_PANO_W, TEST_PANO_H)
_ENV = synthetic_environment(5, width=1024, height=512)


def small_rig():
    return _RIG


def small_scene(seed=5):
    if seed == 5:
        return SceneEnvironment(env_map=_ENV)
    return SceneEnvironment(env_map=synthetic_environment(seed, width=1024, height=512))


def make_device(relay, device_id, **kw):
    kw.setdefault("calib", _RIG)
    kw.setdefault("scene", small_scene())
    kw.setdefault("fps", 10.0)
    kw.setdefault("pano_w", TEST_PANO_W)
    kw.setdefault("pano_h", TEST_PANO_H)
    if kw["calib"] is _RIG and (kw["pano_w"], kw["pano_h"]) == (TEST_PANO_W, TEST_PANO_H):
        kw.setdefault("stitch_map", _SMAP)
    device = DeviceSim(relay.address, device_id=device_id, **kw)
    device.start()
    return device


@pytest.fixture
def relay():
    server = RelayServer()
    server.start()
    yield server
    server.stop()


@pytest.fixture
def stack(relay):
    """One streaming device and one connected client on a loopback relay."""
    device = make_device(relay, 1, name="dev-one")
    client = ClientSession(relay.address, client_id=100, name="op").connect()
    try:
        yield relay, device, client
    finally:
        client.close()
        device.stop()
