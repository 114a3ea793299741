"""
Services layer: checkpoint persistence, image export and the experiment runner.
"""
