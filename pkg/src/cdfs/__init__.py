"""CDFS: a transactional, versioned file system for write-once optical media."""

from .device import AddressScheme, BlockState, Device, DeviceGeometry, NULL_ADDRESS
from .errors import CdfsError
from .volume import StepClock, Volume, compact, fsck, init_volume, mount

__all__ = [
    "AddressScheme", "BlockState", "CdfsError", "Device", "DeviceGeometry", "NULL_ADDRESS",
    "StepClock", "Volume", "compact", "fsck", "init_volume", "mount",
]
