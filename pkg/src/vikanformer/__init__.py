__author__ = "zaemon1251-hesty"
__version__ = "0.1.0"
