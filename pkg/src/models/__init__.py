"""
共通ニューラルネットワーク部品
"""
