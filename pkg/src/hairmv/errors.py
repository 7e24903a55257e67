"""Exception hierarchy.  ``exit_code`` is what the CLI returns for each category."""


class HairMVError(Exception):
    exit_code = 1


class ConfigError(HairMVError, ValueError):
    exit_code = 2


class ShapeError(HairMVError, ValueError):
    exit_code = 5


class PrerequisiteError(HairMVError):
    exit_code = 3


class DataError(HairMVError):
    exit_code = 4
