"""Node daemon: wire framing, role dispatch and station state."""
