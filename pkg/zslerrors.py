#!/usr/bin/env python3

# Exceptions shared by the zero-shot GAN tools. Every error that should end
# a command line run carries the exit code the run should end with.
#
# SPDX-License-Identifier: GPL-3.0-only


class ZslError(Exception):
    '''Base class for errors that terminate a run'''
    exit_code = 1


class ConfigError(ZslError):
    '''Unreadable or invalid configuration'''
    exit_code = 2


class ValidationError(ZslError):
    '''Input that is well formed but violates a constraint'''
    exit_code = 2


class DatasetError(ValidationError):
    '''Dataset validation error, pointing at the offending file'''

    def __init__(self, path, reason, line=None):
        self.path = path
        self.line = line
        if line is None:
            super().__init__(f'{path}: {reason}')
        else:
            super().__init__(f'{path}:{line}: {reason}')


class NumericalError(ZslError):
    '''Non-finite loss or gradient during training'''
    exit_code = 3


class ShapeError(ValueError):
    '''Operand shapes do not fit an operation'''
