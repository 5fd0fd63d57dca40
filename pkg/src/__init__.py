"""
QGCN - Quaternion graph convolution for implicit-feedback recommendation

Version: 1.0.0
License: MIT
"""

__version__ = '1.0.0'
__license__ = 'MIT'
