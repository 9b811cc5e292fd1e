# -*- coding: utf-8 -*-
"""Exception hierarchy shared by every sizeprior module."""


class PrioError(Exception):
    pass


class ValidationError(PrioError):
    """Raised for invalid values, malformed files and unknown config keys.

    Parameters
    ----------
    message : str
        Description of the problem.
    source : str, optional
        File name, subcommand or config section the problem came from.
    field : str, optional
        Offending field, column or dotted config key.
    """
    def __init__(self, message: str, source: str = '', field: str = ''):
        self.source = source
        self.field = field
        parts = []
        if source:
            parts.append(source)
        if field:
            parts.append(field)
        if parts:
            message = ': '.join(parts) + ': ' + message
        super().__init__(message)


class FormatError(ValidationError):
    pass


class RoutingError(ValidationError):
    pass


class NumericError(PrioError):
    pass


class GradientCheckError(PrioError):
    pass
