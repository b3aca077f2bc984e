"""poolforge: a copy-on-write transactional storage pool over RAID-Z1."""

__version__ = "0.1.0"
