"""Sign boundary detection from skeletal streams."""
