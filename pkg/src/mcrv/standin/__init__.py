"""The stand-in operating system: syscall table, components and virtual state."""
