//! Safepoint instrumentation for WebAssembly modules.
//!
//! Rewrites a core module so that it polls for pending asynchronous signals
//! by calling the imported `wali.sigcheck` function at chosen program points.
//! The import is appended after the existing function imports (or reused if
//! the module already has it) and every later function index is shifted.
//!
//! Each poll is guarded by an atomic load of a word in a second imported
//! memory, `wali.sigpending` (one shared page). The host keeps the word
//! nonzero while any signal is pending, so the call is only taken when there
//! may be work. Memory indices after the imported memories shift by one.
//!
//! A custom section named [`MARKER_SECTION`] records the scheme and the
//! import index, which makes instrumentation idempotent.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;
use wasm_encoder::reencode::{self, Reencode};
use wasm_encoder::{BlockType, CustomSection, EntityType, Instruction, MemArg, MemoryType, SectionId};
use wasmparser::{
    BinaryReaderError, ExternalKind, FuncType, Operator, Parser, Payload, TypeRef, Validator,
    WasmFeatures,
};

/// Import module of the poll function.
pub const SIGCHECK_MODULE: &str = "wali";
/// Import name of the poll function.
pub const SIGCHECK_NAME: &str = "sigcheck";
/// Import name of the pending-signal word's memory (same module).
pub const PENDING_NAME: &str = "sigpending";
/// Custom section written into instrumented modules.
pub const MARKER_SECTION: &str = "wali.instrumented";

/// Where safepoint polls are inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SafepointScheme {
    /// First instruction inside every `loop` block.
    Loop,
    /// Entry of every defined function.
    Function,
    /// Function entry plus after every instruction.
    All,
}

impl SafepointScheme {
    pub const ALL: [SafepointScheme; 3] =
        [SafepointScheme::Loop, SafepointScheme::Function, SafepointScheme::All];

    pub fn as_str(self) -> &'static str {
        match self {
            SafepointScheme::Loop => "loop",
            SafepointScheme::Function => "function",
            SafepointScheme::All => "all",
        }
    }
}

impl fmt::Display for SafepointScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SafepointScheme {
    type Err = InstrumentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loop" => Ok(SafepointScheme::Loop),
            "function" | "func" => Ok(SafepointScheme::Function),
            "all" => Ok(SafepointScheme::All),
            other => Err(InstrumentError::UnknownScheme(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum InstrumentError {
    #[error("malformed module at byte offset {offset:#x}: {message}")]
    Malformed { offset: u64, message: String },

    #[error("unsupported feature at byte offset {offset:#x}: {message}")]
    Unsupported { offset: u64, message: String },

    #[error("module is already instrumented with scheme `{existing}` (requested `{requested}`)")]
    AlreadyInstrumented {
        existing: SafepointScheme,
        requested: SafepointScheme,
    },

    #[error("import {SIGCHECK_MODULE}.{SIGCHECK_NAME} must have type [] -> []")]
    SigcheckSignature,

    #[error("import {SIGCHECK_MODULE}.{PENDING_NAME} must be a shared 32-bit memory of at least one page")]
    PendingMemoryType,

    #[error("malformed `{MARKER_SECTION}` section: {0}")]
    BadMarker(String),

    #[error("unknown safepoint scheme `{0}` (expected loop, function or all)")]
    UnknownScheme(String),

    #[error("re-encoding failed: {0}")]
    Encode(String),
}

impl From<BinaryReaderError> for InstrumentError {
    fn from(e: BinaryReaderError) -> Self {
        InstrumentError::Malformed {
            offset: e.offset(),
            message: e.message().to_string(),
        }
    }
}

impl From<reencode::Error<InstrumentError>> for InstrumentError {
    fn from(e: reencode::Error<InstrumentError>) -> Self {
        match e {
            reencode::Error::UserError(e) => e,
            reencode::Error::ParseError(e) => e.into(),
            other => InstrumentError::Encode(other.to_string()),
        }
    }
}

pub type Result<T, E = InstrumentError> = std::result::Result<T, E>;

/// Proposals the pass knows how to rewrite.
pub fn supported_features() -> WasmFeatures {
    WasmFeatures::WASM2
        | WasmFeatures::THREADS
        | WasmFeatures::MULTI_MEMORY
        | WasmFeatures::TAIL_CALL
        | WasmFeatures::EXTENDED_CONST
        | WasmFeatures::RELAXED_SIMD
}

/// Validates `wasm`, distinguishing malformed input from well-formed input
/// that uses a proposal outside [`supported_features`].
pub fn validate(wasm: &[u8]) -> Result<()> {
    match Validator::new_with_features(supported_features()).validate_all(wasm) {
        Ok(_) => Ok(()),
        Err(narrow) => match Validator::new_with_features(WasmFeatures::all()).validate_all(wasm) {
            Ok(_) => Err(InstrumentError::Unsupported {
                offset: narrow.offset(),
                message: narrow.message().to_string(),
            }),
            Err(_) => Err(narrow.into()),
        },
    }
}

/// Contents of the marker section.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Marker {
    pub scheme: SafepointScheme,
    pub sigcheck_index: u32,
    /// Memory index of the pending-signal word.
    pub pending_memory: u32,
}

impl Marker {
    fn encode(&self) -> String {
        format!(
            "scheme={};sigcheck={};sigpending={}",
            self.scheme, self.sigcheck_index, self.pending_memory
        )
    }

    fn decode(data: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(data).map_err(|e| InstrumentError::BadMarker(e.to_string()))?;
        let bad = || InstrumentError::BadMarker(text.into());
        let mut scheme = None;
        let mut index = None;
        let mut memory = None;
        for part in text.split(';') {
            match part.split_once('=') {
                Some(("scheme", v)) => scheme = Some(v.parse()?),
                Some(("sigcheck", v)) => index = Some(v.parse().map_err(|_| bad())?),
                Some(("sigpending", v)) => memory = Some(v.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        match (scheme, index, memory) {
            (Some(scheme), Some(sigcheck_index), Some(pending_memory)) => Ok(Marker {
                scheme,
                sigcheck_index,
                pending_memory,
            }),
            _ => Err(bad()),
        }
    }
}

/// What a first pass over the module learns before rewriting.
#[derive(Debug, Default)]
struct Survey {
    func_imports: u32,
    memory_imports: u32,
    sigcheck: Option<u32>,
    pending: Option<u32>,
    nullary_type: Option<u32>,
    type_count: u32,
    marker: Option<Marker>,
}

fn survey(wasm: &[u8]) -> Result<Survey> {
    let mut s = Survey::default();
    let mut types: Vec<Option<FuncType>> = Vec::new();
    for payload in Parser::new(0).parse_all(wasm) {
        match payload? {
            Payload::TypeSection(reader) => {
                for ty in reader.into_iter_err_on_gc_types() {
                    let ty = ty?;
                    let idx = types.len() as u32;
                    if ty.params().is_empty() && ty.results().is_empty() && s.nullary_type.is_none()
                    {
                        s.nullary_type = Some(idx);
                    }
                    types.push(Some(ty));
                }
            }
            Payload::ImportSection(reader) => {
                for import in reader.into_imports() {
                    let import = import?;
                    if let TypeRef::Memory(m) = import.ty {
                        if import.module == SIGCHECK_MODULE && import.name == PENDING_NAME {
                            if !m.shared || m.memory64 || m.initial < 1 {
                                return Err(InstrumentError::PendingMemoryType);
                            }
                            s.pending.get_or_insert(s.memory_imports);
                        }
                        s.memory_imports += 1;
                    }
                    if let TypeRef::Func(ty) = import.ty {
                        if import.module == SIGCHECK_MODULE && import.name == SIGCHECK_NAME {
                            let nullary = types
                                .get(ty as usize)
                                .and_then(Option::as_ref)
                                .is_some_and(|t| t.params().is_empty() && t.results().is_empty());
                            if !nullary {
                                return Err(InstrumentError::SigcheckSignature);
                            }
                            s.sigcheck.get_or_insert(s.func_imports);
                        }
                        s.func_imports += 1;
                    }
                }
            }
            Payload::CustomSection(reader) if reader.name() == MARKER_SECTION => {
                s.marker = Some(Marker::decode(reader.data())?);
            }
            _ => {}
        }
    }
    s.type_count = types.len() as u32;
    Ok(s)
}

/// Reads the marker section, if the module has been instrumented.
pub fn marker(wasm: &[u8]) -> Result<Option<Marker>> {
    for payload in Parser::new(0).parse_all(wasm) {
        if let Payload::CustomSection(reader) = payload? {
            if reader.name() == MARKER_SECTION {
                return Marker::decode(reader.data()).map(Some);
            }
        }
    }
    Ok(None)
}

/// Inserts safepoint polls according to `scheme`.
///
/// Re-instrumenting with the scheme already recorded in the marker returns
/// the input unchanged.
pub fn instrument_module(wasm: &[u8], scheme: SafepointScheme) -> Result<Vec<u8>> {
    validate(wasm)?;
    let survey = survey(wasm)?;
    if let Some(marker) = survey.marker {
        if marker.scheme == scheme {
            return Ok(wasm.to_vec());
        }
        return Err(InstrumentError::AlreadyInstrumented {
            existing: marker.scheme,
            requested: scheme,
        });
    }

    let (sigcheck, insert) = match survey.sigcheck {
        Some(idx) => (idx, None),
        None => {
            let ty = survey.nullary_type.unwrap_or(survey.type_count);
            (survey.func_imports, Some(ty))
        }
    };
    let (pending_memory, memory_shift_from) = match survey.pending {
        Some(idx) => (idx, None),
        None => (survey.memory_imports, Some(survey.memory_imports)),
    };
    let mut rewriter = Rewriter {
        scheme,
        sigcheck,
        pending_memory,
        memory_shift_from,
        shift_from: insert.map(|_| survey.func_imports),
        new_type: match (insert, survey.nullary_type) {
            (Some(ty), None) => Some(ty),
            _ => None,
        },
        import_type: insert,
        emitted_types: false,
        emitted_import: false,
    };

    let mut module = wasm_encoder::Module::new();
    rewriter.parse_core_module(&mut module, Parser::new(0), wasm)?;
    let marker = Marker {
        scheme,
        sigcheck_index: sigcheck,
        pending_memory,
    }
    .encode();
    module.section(&CustomSection {
        name: Cow::Borrowed(MARKER_SECTION),
        data: Cow::Borrowed(marker.as_bytes()),
    });
    let out = module.finish();

    // The pass must never produce something the engine would reject.
    Validator::new_with_features(supported_features())
        .validate_all(&out)
        .map_err(|e| InstrumentError::Encode(format!("output failed validation: {e}")))?;
    Ok(out)
}

struct Rewriter {
    scheme: SafepointScheme,
    sigcheck: u32,
    pending_memory: u32,
    /// First memory index that moves up by one, when the memory is new.
    memory_shift_from: Option<u32>,
    /// First function index that moves up by one, when the import is new.
    shift_from: Option<u32>,
    /// Index of a `[] -> []` type to append, when none exists.
    new_type: Option<u32>,
    /// Type of the import to append, when the import is new.
    import_type: Option<u32>,
    emitted_types: bool,
    emitted_import: bool,
}

impl Rewriter {
    fn type_section_with_new_type(&mut self, types: &mut wasm_encoder::TypeSection) {
        if self.new_type.is_some() && !self.emitted_types {
            types.ty().function([], []);
        }
        self.emitted_types = true;
    }

    fn append_import(&mut self, imports: &mut wasm_encoder::ImportSection) {
        if !self.emitted_import {
            if let Some(ty) = self.import_type {
                imports.import(SIGCHECK_MODULE, SIGCHECK_NAME, EntityType::Function(ty));
            }
            if self.memory_shift_from.is_some() {
                let ty = MemoryType {
                    minimum: 1,
                    maximum: Some(1),
                    memory64: false,
                    shared: true,
                    page_size_log2: None,
                };
                imports.import(SIGCHECK_MODULE, PENDING_NAME, EntityType::Memory(ty));
            }
        }
        self.emitted_import = true;
    }

    /// `if (i32.atomic.load sigpending[0]) { call sigcheck }`
    fn poll(&self, f: &mut wasm_encoder::Function) {
        f.instruction(&Instruction::I32Const(0));
        f.instruction(&Instruction::I32AtomicLoad(MemArg {
            offset: 0,
            align: 2,
            memory_index: self.pending_memory,
        }));
        f.instruction(&Instruction::If(BlockType::Empty));
        f.instruction(&Instruction::Call(self.sigcheck));
        f.instruction(&Instruction::End);
    }
}

fn section_order(id: SectionId) -> u8 {
    // Binary order differs from the numeric id for tag and data-count.
    match id {
        SectionId::Custom => 0,
        SectionId::Type => 1,
        SectionId::Import => 2,
        SectionId::Function => 3,
        SectionId::Table => 4,
        SectionId::Memory => 5,
        SectionId::Tag => 6,
        SectionId::Global => 7,
        SectionId::Export => 8,
        SectionId::Start => 9,
        SectionId::Element => 10,
        SectionId::DataCount => 11,
        SectionId::Code => 12,
        SectionId::Data => 13,
    }
}

impl Reencode for Rewriter {
    type Error = InstrumentError;

    fn memory_index(&mut self, memory: u32) -> Result<u32, reencode::Error<Self::Error>> {
        Ok(match self.memory_shift_from {
            Some(from) if memory >= from => memory + 1,
            _ => memory,
        })
    }

    fn function_index(&mut self, func: u32) -> Result<u32, reencode::Error<Self::Error>> {
        Ok(match self.shift_from {
            Some(from) if func >= from => func + 1,
            _ => func,
        })
    }

    fn parse_type_section(
        &mut self,
        types: &mut wasm_encoder::TypeSection,
        section: wasmparser::TypeSectionReader<'_>,
    ) -> Result<(), reencode::Error<Self::Error>> {
        reencode::utils::parse_type_section(self, types, section)?;
        self.type_section_with_new_type(types);
        Ok(())
    }

    fn parse_import_section(
        &mut self,
        imports: &mut wasm_encoder::ImportSection,
        section: wasmparser::ImportSectionReader<'_>,
    ) -> Result<(), reencode::Error<Self::Error>> {
        reencode::utils::parse_import_section(self, imports, section)?;
        self.append_import(imports);
        Ok(())
    }

    fn intersperse_section_hook(
        &mut self,
        module: &mut wasm_encoder::Module,
        _after: Option<SectionId>,
        before: Option<SectionId>,
    ) -> Result<(), reencode::Error<Self::Error>> {
        let before = before.map_or(u8::MAX, section_order);
        if !self.emitted_types && before > section_order(SectionId::Type) {
            let mut types = wasm_encoder::TypeSection::new();
            self.type_section_with_new_type(&mut types);
            if !types.is_empty() {
                module.section(&types);
            }
        }
        if !self.emitted_import && before > section_order(SectionId::Import) {
            let mut imports = wasm_encoder::ImportSection::new();
            self.append_import(&mut imports);
            if !imports.is_empty() {
                module.section(&imports);
            }
        }
        Ok(())
    }

    fn parse_custom_section(
        &mut self,
        module: &mut wasm_encoder::Module,
        section: wasmparser::CustomSectionReader<'_>,
    ) -> Result<(), reencode::Error<Self::Error>> {
        if section.name() == MARKER_SECTION {
            return Ok(());
        }
        reencode::utils::parse_custom_section(self, module, section)
    }

    fn parse_function_body(
        &mut self,
        code: &mut wasm_encoder::CodeSection,
        func: wasmparser::FunctionBody<'_>,
    ) -> Result<(), reencode::Error<Self::Error>> {
        let mut f = self.new_function_with_parsed_locals(&func)?;
        let mut reader = func.get_operators_reader()?;
        if matches!(self.scheme, SafepointScheme::Function | SafepointScheme::All) {
            self.poll(&mut f);
        }
        while !reader.eof() {
            let op = reader.read()?;
            let is_loop = matches!(op, Operator::Loop { .. });
            f.instruction(&self.instruction(op)?);
            let poll = match self.scheme {
                SafepointScheme::Loop => is_loop,
                SafepointScheme::Function => false,
                // Nothing may follow the body's final `end`.
                SafepointScheme::All => !reader.eof(),
            };
            if poll {
                self.poll(&mut f);
            }
        }
        code.function(&f);
        Ok(())
    }
}

/// Static safepoint call sites per defined function, in definition order.
pub fn count_safepoints(wasm: &[u8]) -> Result<Vec<u32>> {
    validate(wasm)?;
    let sigcheck = survey(wasm)?.sigcheck;
    let mut counts = Vec::new();
    for payload in Parser::new(0).parse_all(wasm) {
        if let Payload::CodeSectionEntry(body) = payload? {
            let mut n = 0;
            if let Some(idx) = sigcheck {
                for op in body.get_operators_reader()? {
                    if matches!(op?, Operator::Call { function_index } if function_index == idx) {
                        n += 1;
                    }
                }
            }
            counts.push(n);
        }
    }
    Ok(counts)
}

/// Instructions per defined function body, excluding the body's final `end`.
pub fn instruction_counts(wasm: &[u8]) -> Result<Vec<u32>> {
    let mut counts = Vec::new();
    for payload in Parser::new(0).parse_all(wasm) {
        if let Payload::CodeSectionEntry(body) = payload? {
            let ops = body.get_operators_reader()?.into_iter().count() as u32;
            counts.push(ops.saturating_sub(1));
        }
    }
    Ok(counts)
}

/// Names of exported functions, for diagnostics.
pub fn exported_functions(wasm: &[u8]) -> Result<Vec<(String, u32)>> {
    let mut out = Vec::new();
    for payload in Parser::new(0).parse_all(wasm) {
        if let Payload::ExportSection(reader) = payload? {
            for export in reader {
                let export = export?;
                if export.kind == ExternalKind::Func {
                    out.push((export.name.to_string(), export.index));
                }
            }
        }
    }
    Ok(out)
}
