"""Failure categories shared by the harness and mapped to CLI exit codes."""


class KaldexError(Exception):
    exit_code = 1


class ConfigError(KaldexError, ValueError):
    exit_code = 2


class DataError(KaldexError):
    exit_code = 3


class NumericError(KaldexError):
    exit_code = 4


class CheckpointVersionError(KaldexError):
    exit_code = 5


class MissingArtifactError(KaldexError, FileNotFoundError):
    exit_code = 6
