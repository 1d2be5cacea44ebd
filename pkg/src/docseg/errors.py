"""Exception taxonomy shared across the toolkit.

Contract violations signal a broken internal invariant or misuse of an
operation (wrong shapes, wrong mode); input errors signal bad data handed
in from the outside (files, configs, out-of-range labels). The CLI maps
the former to exit code 1 and the latter, together with IO failures, to
exit code 2.
"""


class ContractViolation(Exception):
    """An operation was called with arguments that break its contract."""


class InputError(Exception):
    """External input (dataset, config, corpus) is invalid."""


class ConfigError(InputError):
    """A configuration file is malformed or inconsistent."""


class OOVError(InputError):
    """A token is not present in the embedding vocabulary."""
