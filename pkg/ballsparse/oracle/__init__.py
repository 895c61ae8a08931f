"""
Independent reference implementations used to verify the attention kernels
Nothing here imports from ballsparse.processing.attention
"""
