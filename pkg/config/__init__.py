"""
Config package initialization.
"""

from config.settings import *
