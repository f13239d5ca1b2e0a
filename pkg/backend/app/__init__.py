"""
LipField: speech-driven 3D talking heads through landmark motion.
"""
