"""
Genetic block selection and OTDD block importance for transfer learning.
"""

__version__ = "0.1.0"
