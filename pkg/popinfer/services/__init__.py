"""Filter, model and pipeline services"""
