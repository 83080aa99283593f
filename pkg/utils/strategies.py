from enum import Enum

TrainingStrategy = Enum('TrainingStrategy', ['balanced', 'mine'])

CloudFormat = Enum('CloudFormat', ['ascii_xyz', 'ply_binary'])
