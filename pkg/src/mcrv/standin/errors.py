"""Control-flow signals raised by syscall implementations."""


class OsInitError(Exception):
    """The OS configuration cannot be booted."""


class Blocked(Exception):
    """The calling guest thread must wait until ``resource`` changes."""

    def __init__(self, resource: tuple):
        super().__init__(resource)
        self.resource = resource


class Retry(Exception):
    """The host reported EAGAIN; re-issue the call after a scheduling point."""
