"""minimr: a small fault-tolerant MapReduce engine used as the system under test."""
