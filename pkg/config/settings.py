import os
from dotenv import load_dotenv

from core.exceptions import ConfigError

# Load environment variables
load_dotenv()


def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ('1', 'true', 'yes', 'on')


class Config:
    """Runtime configuration"""

    ENV = os.getenv('COCSI_ENV', 'development')

    # Worker parallelism (dataset generation, comparison arms)
    THREADS = int(os.getenv('COCSI_THREADS', os.cpu_count() or 1))

    # Output locations
    OUT_DIR = os.getenv('COCSI_OUT_DIR', './runs')

    # Logging / progress
    LOG_LEVEL = os.getenv('COCSI_LOG_LEVEL', 'INFO').upper()
    SHOW_PROGRESS = _env_flag('COCSI_PROGRESS', 'true')

    # Numerics: float32 for training, float64 for gradient checks
    PRECISION = os.getenv('COCSI_PRECISION', 'float32')

    # Validation
    @classmethod
    def validate_config(cls):
        """Validate runtime configuration"""
        if cls.THREADS < 1:
            raise ConfigError(f"must be >= 1, got {cls.THREADS}", key='COCSI_THREADS')

        if cls.PRECISION not in ('float32', 'float64'):
            raise ConfigError(f"must be float32 or float64, got {cls.PRECISION!r}", key='COCSI_PRECISION')

        if cls.LOG_LEVEL not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ConfigError(f"unknown log level {cls.LOG_LEVEL!r}", key='COCSI_LOG_LEVEL')

        # Create necessary directories
        os.makedirs(cls.OUT_DIR, exist_ok=True)

        return True


class DevelopmentConfig(Config):
    """Development configuration"""
    DEBUG = True
    ENV = 'development'
    LOG_LEVEL = os.getenv('COCSI_LOG_LEVEL', 'DEBUG').upper()


class ProductionConfig(Config):
    """Production configuration"""
    DEBUG = False
    ENV = 'production'


class TestConfig(Config):
    """Test configuration: serial, quiet, double precision"""
    DEBUG = True
    ENV = 'test'
    THREADS = 1
    SHOW_PROGRESS = False
    PRECISION = 'float64'
    LOG_LEVEL = 'WARNING'


# Configuration mapping
config_map = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'test': TestConfig,
    'default': DevelopmentConfig
}


def get_config():
    """Get configuration based on environment"""
    env = os.getenv('COCSI_ENV', 'development')
    return config_map.get(env, DevelopmentConfig)
