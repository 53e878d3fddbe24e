# Parsers, binary codecs, keyed RNG and validators
