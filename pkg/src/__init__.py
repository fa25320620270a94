"""
csparts - classification-specific part estimation for fine-grained recognition
"""
