"""Raw point-cloud parsing and conversion to .PcRecord."""
from pcpipe.ingest.convert import SCHEMA_PRESETS, ConversionReport, convert, find_sources, preset_schema, resample
from pcpipe.ingest.parsers import ParsedCloud, SourceKind, parse_source
