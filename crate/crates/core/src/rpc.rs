//! Remote procedure calls routed to the server, to one client or to every
//! joined client, plus client-initiated server-push streams.
//!
//! Both ends are sans-IO: they consume decoded [`MessageBody`] values and
//! emit bodies to send. Handlers run when the server processes a message;
//! everything they produce leaves through the outbound queue afterwards.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use thiserror::Error;

use crate::schema::{MethodDef, MethodMode, Schema, ValueKind};
use crate::wire::{MessageBody, PropertyValue, RpcRequest, RpcResponse, RpcStatus, RpcTarget};

pub type SessionId = u32;

/// Reserved application error codes.
pub mod codes {
    pub const NOT_IMPLEMENTED: u16 = 1;
    pub const INVALID_ARGUMENT: u16 = 2;
    pub const INVALID_RESULT: u16 = 3;
}

/// Default call timeout as a multiple of the retransmission timeout.
pub const TIMEOUT_RTO_MULTIPLE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RpcError {
    #[error("unknown method {0}")]
    UnknownMethod(u16),
    #[error("method {method_id} takes {expected} arguments, got {actual}")]
    ArgCount {
        method_id: u16,
        expected: usize,
        actual: usize,
    },
    #[error("method {method_id} argument {index}: expected {expected}, got {actual}")]
    KindMismatch {
        method_id: u16,
        index: usize,
        expected: ValueKind,
        actual: ValueKind,
    },
    #[error("method {0} already has a handler")]
    DuplicateHandler(u16),
    #[error("method {0} is not a stream method")]
    NotAStreamMethod(u16),
    #[error("method {0} is a stream method; open a stream instead")]
    NotAUnaryMethod(u16),
    #[error("stream {0} is closed")]
    StreamClosed(u64),
    #[error("unknown stream {0}")]
    UnknownStream(u64),
    #[error("no pending call {0}")]
    UnknownCall(u64),
    #[error("session {0} has not joined")]
    NotJoined(SessionId),
    #[error("result does not match the declared return of method {0}")]
    InvalidResult(u16),
}

/// Checks argument count and kinds against the method signature.
pub fn check_args(method: &MethodDef, args: &[PropertyValue]) -> Result<(), RpcError> {
    if method.params.len() != args.len() {
        return Err(RpcError::ArgCount {
            method_id: method.method_id,
            expected: method.params.len(),
            actual: args.len(),
        });
    }
    for (index, (kind, arg)) in method.params.iter().zip(args).enumerate() {
        if *kind != arg.kind() {
            return Err(RpcError::KindMismatch {
                method_id: method.method_id,
                index,
                expected: *kind,
                actual: arg.kind(),
            });
        }
    }
    Ok(())
}

fn check_result(method: &MethodDef, value: &Option<PropertyValue>) -> Result<(), RpcError> {
    let ok = match (method.returns, value) {
        (None, None) => true,
        (Some(k), Some(v)) => v.kind() == k,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(RpcError::InvalidResult(method.method_id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallContext {
    pub session: SessionId,
    pub call_id: u64,
    pub method_id: u16,
}

/// What a unary handler hands back.
#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    /// Finished: a value (or none) on success, an application code on failure.
    Now(Result<Option<PropertyValue>, u16>),
    /// Completed later through [`RpcServer::complete`].
    Later,
}

impl Reply {
    pub fn ok(value: PropertyValue) -> Self {
        Reply::Now(Ok(Some(value)))
    }

    pub fn done() -> Self {
        Reply::Now(Ok(None))
    }

    pub fn error(code: u16) -> Self {
        Reply::Now(Err(code))
    }
}

pub type Handler = Box<dyn FnMut(&CallContext, &[PropertyValue]) -> Reply + Send>;
pub type StreamOpener = Box<dyn FnMut(&CallContext, &[PropertyValue]) -> Result<(), u16> + Send>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamState {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHandle {
    pub stream_id: u64,
    pub method_id: u16,
    pub state: StreamState,
}

/// Server side of an open stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerStream {
    pub session: SessionId,
    pub handle: StreamHandle,
    next_seq: u32,
}

impl ServerStream {
    pub fn pushed(&self) -> u32 {
        self.next_seq
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: SessionId,
    pub body: MessageBody,
    pub reliable: bool,
}

#[derive(Debug, Clone)]
enum CallRecord {
    Pending { method_id: u16, reliable: bool },
    Done { response: RpcResponse, reliable: bool },
}

pub struct RpcServer {
    schema: Arc<Schema>,
    handlers: BTreeMap<u16, Handler>,
    openers: BTreeMap<u16, StreamOpener>,
    sessions: BTreeSet<SessionId>,
    calls: BTreeMap<(SessionId, u64), CallRecord>,
    streams: BTreeMap<(SessionId, u64), ServerStream>,
    relay_ids: BTreeMap<SessionId, u64>,
    outbound: VecDeque<Outbound>,
    invocations: u64,
    duplicates: u64,
}

impl RpcServer {
    pub fn new(schema: Arc<Schema>) -> Self {
        Self {
            schema,
            handlers: BTreeMap::new(),
            openers: BTreeMap::new(),
            sessions: BTreeSet::new(),
            calls: BTreeMap::new(),
            streams: BTreeMap::new(),
            relay_ids: BTreeMap::new(),
            outbound: VecDeque::new(),
            invocations: 0,
            duplicates: 0,
        }
    }

    fn method(&self, method_id: u16) -> Result<&MethodDef, RpcError> {
        self.schema
            .lookup_method(method_id)
            .ok_or(RpcError::UnknownMethod(method_id))
    }

    pub fn register_handler(
        &mut self,
        method_id: u16,
        handler: impl FnMut(&CallContext, &[PropertyValue]) -> Reply + Send + 'static,
    ) -> Result<(), RpcError> {
        if self.method(method_id)?.mode != MethodMode::Unary {
            return Err(RpcError::NotAUnaryMethod(method_id));
        }
        if self.handlers.contains_key(&method_id) {
            return Err(RpcError::DuplicateHandler(method_id));
        }
        self.handlers.insert(method_id, Box::new(handler));
        Ok(())
    }

    pub fn register_stream_handler(
        &mut self,
        method_id: u16,
        opener: impl FnMut(&CallContext, &[PropertyValue]) -> Result<(), u16> + Send + 'static,
    ) -> Result<(), RpcError> {
        if self.method(method_id)?.mode != MethodMode::ServerStream {
            return Err(RpcError::NotAStreamMethod(method_id));
        }
        if self.openers.contains_key(&method_id) {
            return Err(RpcError::DuplicateHandler(method_id));
        }
        self.openers.insert(method_id, Box::new(opener));
        Ok(())
    }

    pub fn join(&mut self, session: SessionId) {
        self.sessions.insert(session);
    }

    /// Forgets a session: its calls, its streams and its relay counter.
    pub fn leave(&mut self, session: SessionId) {
        self.sessions.remove(&session);
        self.calls.retain(|(s, _), _| *s != session);
        self.streams.retain(|(s, _), _| *s != session);
        self.relay_ids.remove(&session);
    }

    pub fn is_joined(&self, session: SessionId) -> bool {
        self.sessions.contains(&session)
    }

    pub fn sessions(&self) -> impl Iterator<Item = SessionId> + '_ {
        self.sessions.iter().copied()
    }

    /// Number of handler and stream-opener executions so far.
    pub fn handler_invocations(&self) -> u64 {
        self.invocations
    }

    /// Requests seen again after their first arrival.
    pub fn duplicate_requests(&self) -> u64 {
        self.duplicates
    }

    pub fn drain_outbound(&mut self) -> Vec<Outbound> {
        self.outbound.drain(..).collect()
    }

    fn respond(&mut self, to: SessionId, response: RpcResponse, reliable: bool) {
        self.calls.insert(
            (to, response.call_id),
            CallRecord::Done {
                response: response.clone(),
                reliable,
            },
        );
        self.outbound.push_back(Outbound {
            to,
            body: MessageBody::RpcResponse(response),
            reliable,
        });
    }

    fn status_response(call_id: u64, status: RpcStatus) -> RpcResponse {
        RpcResponse {
            call_id,
            status,
            value: None,
        }
    }

    /// Handles one message from `session`. Non-RPC bodies are ignored.
    pub fn on_message(&mut self, session: SessionId, body: &MessageBody) -> Result<(), RpcError> {
        let MessageBody::RpcRequest(req) = body else {
            return Ok(());
        };
        if !self.sessions.contains(&session) {
            return Err(RpcError::NotJoined(session));
        }
        match self.calls.get(&(session, req.call_id)) {
            Some(CallRecord::Done { response, reliable }) => {
                self.duplicates += 1;
                let out = Outbound {
                    to: session,
                    body: MessageBody::RpcResponse(response.clone()),
                    reliable: *reliable,
                };
                self.outbound.push_back(out);
                return Ok(());
            }
            Some(CallRecord::Pending { .. }) => {
                self.duplicates += 1;
                return Ok(());
            }
            None => {}
        }
        let Some(method) = self.schema.lookup_method(req.method_id).cloned() else {
            let r = Self::status_response(req.call_id, RpcStatus::AppError(codes::NOT_IMPLEMENTED));
            self.respond(session, r, req.reliable);
            return Ok(());
        };
        if check_args(&method, &req.args).is_err() {
            let r = Self::status_response(req.call_id, RpcStatus::AppError(codes::INVALID_ARGUMENT));
            self.respond(session, r, req.reliable);
            return Ok(());
        }
        match req.target {
            RpcTarget::Server => self.dispatch(session, req, &method),
            RpcTarget::Client(id) => {
                let status = if self.sessions.contains(&id) {
                    self.relay(id, req);
                    RpcStatus::Ok
                } else {
                    RpcStatus::Unroutable
                };
                self.respond(session, Self::status_response(req.call_id, status), req.reliable);
            }
            RpcTarget::Multicast => {
                let targets: Vec<_> = self.sessions.iter().copied().collect();
                for id in targets {
                    self.relay(id, req);
                }
                self.respond(session, Self::status_response(req.call_id, RpcStatus::Ok), req.reliable);
            }
        }
        Ok(())
    }

    fn relay(&mut self, to: SessionId, req: &RpcRequest) {
        let id = self.relay_ids.entry(to).or_insert(0);
        *id += 1;
        self.outbound.push_back(Outbound {
            to,
            body: MessageBody::RpcRequest(RpcRequest {
                call_id: *id,
                ..req.clone()
            }),
            reliable: req.reliable,
        });
    }

    fn dispatch(&mut self, session: SessionId, req: &RpcRequest, method: &MethodDef) {
        let ctx = CallContext {
            session,
            call_id: req.call_id,
            method_id: req.method_id,
        };
        match method.mode {
            MethodMode::Unary => {
                let Some(handler) = self.handlers.get_mut(&req.method_id) else {
                    let r = Self::status_response(req.call_id, RpcStatus::AppError(codes::NOT_IMPLEMENTED));
                    self.respond(session, r, req.reliable);
                    return;
                };
                self.invocations += 1;
                match handler(&ctx, &req.args) {
                    Reply::Later => {
                        self.calls.insert(
                            (session, req.call_id),
                            CallRecord::Pending {
                                method_id: req.method_id,
                                reliable: req.reliable,
                            },
                        );
                    }
                    Reply::Now(result) => {
                        let r = Self::finish(method, req.call_id, result);
                        self.respond(session, r, req.reliable);
                    }
                }
            }
            MethodMode::ServerStream => {
                let Some(opener) = self.openers.get_mut(&req.method_id) else {
                    let r = Self::status_response(req.call_id, RpcStatus::AppError(codes::NOT_IMPLEMENTED));
                    self.respond(session, r, req.reliable);
                    return;
                };
                self.invocations += 1;
                match opener(&ctx, &req.args) {
                    Ok(()) => {
                        self.calls.insert(
                            (session, req.call_id),
                            CallRecord::Pending {
                                method_id: req.method_id,
                                reliable: true,
                            },
                        );
                        self.streams.insert(
                            (session, req.call_id),
                            ServerStream {
                                session,
                                handle: StreamHandle {
                                    stream_id: req.call_id,
                                    method_id: req.method_id,
                                    state: StreamState::Open,
                                },
                                next_seq: 0,
                            },
                        );
                    }
                    Err(code) => {
                        let r = Self::status_response(req.call_id, RpcStatus::AppError(code));
                        self.respond(session, r, true);
                    }
                }
            }
        }
    }

    fn finish(method: &MethodDef, call_id: u64, result: Result<Option<PropertyValue>, u16>) -> RpcResponse {
        match result {
            Ok(value) if check_result(method, &value).is_ok() => RpcResponse {
                call_id,
                status: RpcStatus::Ok,
                value,
            },
            Ok(_) => Self::status_response(call_id, RpcStatus::AppError(codes::INVALID_RESULT)),
            Err(code) => Self::status_response(call_id, RpcStatus::AppError(code)),
        }
    }

    /// Completes a call whose handler answered [`Reply::Later`].
    pub fn complete(
        &mut self,
        session: SessionId,
        call_id: u64,
        result: Result<Option<PropertyValue>, u16>,
    ) -> Result<(), RpcError> {
        let Some(CallRecord::Pending { method_id, reliable }) = self.calls.get(&(session, call_id)).cloned() else {
            return Err(RpcError::UnknownCall(call_id));
        };
        if self.streams.contains_key(&(session, call_id)) {
            return Err(RpcError::UnknownCall(call_id));
        }
        let method = self.method(method_id)?.clone();
        if let Ok(v) = &result {
            check_result(&method, v)?;
        }
        let r = Self::finish(&method, call_id, result);
        self.respond(session, r, reliable);
        Ok(())
    }

    pub fn stream(&self, session: SessionId, stream_id: u64) -> Option<&ServerStream> {
        self.streams.get(&(session, stream_id))
    }

    pub fn open_streams(&self) -> impl Iterator<Item = &ServerStream> {
        self.streams.values().filter(|s| s.handle.state == StreamState::Open)
    }

    /// Sends one element down an open stream.
    pub fn push(&mut self, session: SessionId, stream_id: u64, value: PropertyValue) -> Result<(), RpcError> {
        let stream = self
            .streams
            .get_mut(&(session, stream_id))
            .ok_or(RpcError::UnknownStream(stream_id))?;
        if stream.handle.state == StreamState::Closed {
            return Err(RpcError::StreamClosed(stream_id));
        }
        let method = self
            .schema
            .lookup_method(stream.handle.method_id)
            .ok_or(RpcError::UnknownMethod(stream.handle.method_id))?;
        if method.returns != Some(value.kind()) {
            return Err(RpcError::InvalidResult(method.method_id));
        }
        let seq = stream.next_seq;
        stream.next_seq += 1;
        self.outbound.push_back(Outbound {
            to: session,
            body: MessageBody::StreamData { stream_id, seq, value },
            reliable: true,
        });
        Ok(())
    }

    /// Ends a stream; the client sees an `Ok` response for the opening call.
    pub fn close(&mut self, session: SessionId, stream_id: u64) -> Result<(), RpcError> {
        let stream = self
            .streams
            .get_mut(&(session, stream_id))
            .ok_or(RpcError::UnknownStream(stream_id))?;
        if stream.handle.state == StreamState::Closed {
            return Err(RpcError::StreamClosed(stream_id));
        }
        stream.handle.state = StreamState::Closed;
        self.respond(session, Self::status_response(stream_id, RpcStatus::Ok), true);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallFailure {
    AppError(u16),
    Unroutable,
    Timeout,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientEvent {
    Completed {
        call_id: u64,
        result: Result<Option<PropertyValue>, CallFailure>,
    },
    StreamItem {
        stream_id: u64,
        value: PropertyValue,
    },
    StreamEnd {
        stream_id: u64,
        status: RpcStatus,
    },
    /// A call relayed by the server to this client.
    Invoked {
        method_id: u16,
        target: RpcTarget,
        args: Vec<PropertyValue>,
    },
}

#[derive(Debug, Clone)]
struct ClientStream {
    handle: StreamHandle,
    next_seq: u32,
    buffered: BTreeMap<u32, PropertyValue>,
}

pub struct RpcClient {
    schema: Arc<Schema>,
    session: SessionId,
    timeout_ms: f64,
    next_call_id: u64,
    pending: BTreeMap<u64, f64>,
    streams: BTreeMap<u64, ClientStream>,
    relayed_seen: BTreeSet<u64>,
    events: VecDeque<ClientEvent>,
    late_responses: u64,
}

impl RpcClient {
    pub fn new(schema: Arc<Schema>, session: SessionId, timeout_ms: f64) -> Self {
        Self {
            schema,
            session,
            timeout_ms,
            next_call_id: 1,
            pending: BTreeMap::new(),
            streams: BTreeMap::new(),
            relayed_seen: BTreeSet::new(),
            events: VecDeque::new(),
            late_responses: 0,
        }
    }

    /// Client whose calls time out after ten retransmission timeouts.
    pub fn with_rto(schema: Arc<Schema>, session: SessionId, rto_ms: f64) -> Self {
        Self::new(schema, session, TIMEOUT_RTO_MULTIPLE * rto_ms)
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    pub fn timeout_ms(&self) -> f64 {
        self.timeout_ms
    }

    pub fn pending_calls(&self) -> usize {
        self.pending.len()
    }

    /// Responses that arrived after their call had already timed out.
    pub fn late_responses(&self) -> u64 {
        self.late_responses
    }

    fn checked(&self, method_id: u16, args: &[PropertyValue]) -> Result<&MethodDef, RpcError> {
        let method = self
            .schema
            .lookup_method(method_id)
            .ok_or(RpcError::UnknownMethod(method_id))?;
        check_args(method, args)?;
        Ok(method)
    }

    /// Validates and builds a call. The returned body goes on the reliable
    /// channel when `reliable` is set.
    pub fn invoke(
        &mut self,
        method_id: u16,
        target: RpcTarget,
        args: Vec<PropertyValue>,
        reliable: bool,
        now_ms: f64,
    ) -> Result<(u64, MessageBody), RpcError> {
        if self.checked(method_id, &args)?.mode != MethodMode::Unary {
            return Err(RpcError::NotAUnaryMethod(method_id));
        }
        let call_id = self.next_call_id;
        self.next_call_id += 1;
        self.pending.insert(call_id, now_ms + self.timeout_ms);
        let body = MessageBody::RpcRequest(RpcRequest {
            call_id,
            method_id,
            target,
            reliable,
            args,
        });
        Ok((call_id, body))
    }

    /// Opens a server-push stream; the body must go on the reliable channel.
    pub fn open_stream(&mut self, method_id: u16, args: Vec<PropertyValue>) -> Result<(StreamHandle, MessageBody), RpcError> {
        if self.checked(method_id, &args)?.mode != MethodMode::ServerStream {
            return Err(RpcError::NotAStreamMethod(method_id));
        }
        let stream_id = self.next_call_id;
        self.next_call_id += 1;
        let handle = StreamHandle {
            stream_id,
            method_id,
            state: StreamState::Open,
        };
        self.streams.insert(
            stream_id,
            ClientStream {
                handle,
                next_seq: 0,
                buffered: BTreeMap::new(),
            },
        );
        let body = MessageBody::RpcRequest(RpcRequest {
            call_id: stream_id,
            method_id,
            target: RpcTarget::Server,
            reliable: true,
            args,
        });
        Ok((handle, body))
    }

    pub fn stream(&self, stream_id: u64) -> Option<StreamHandle> {
        self.streams.get(&stream_id).map(|s| s.handle)
    }

    pub fn on_message(&mut self, body: &MessageBody) {
        match body {
            MessageBody::RpcResponse(r) => {
                if let Some(s) = self.streams.get_mut(&r.call_id) {
                    if s.handle.state == StreamState::Open {
                        s.handle.state = StreamState::Closed;
                        self.events.push_back(ClientEvent::StreamEnd {
                            stream_id: r.call_id,
                            status: r.status,
                        });
                    }
                    return;
                }
                if self.pending.remove(&r.call_id).is_none() {
                    self.late_responses += 1;
                    return;
                }
                let result = match r.status {
                    RpcStatus::Ok => Ok(r.value.clone()),
                    RpcStatus::AppError(c) => Err(CallFailure::AppError(c)),
                    RpcStatus::Unroutable => Err(CallFailure::Unroutable),
                };
                self.events.push_back(ClientEvent::Completed {
                    call_id: r.call_id,
                    result,
                });
            }
            MessageBody::StreamData { stream_id, seq, value } => {
                let Some(s) = self.streams.get_mut(stream_id) else {
                    return;
                };
                if s.handle.state == StreamState::Closed || *seq < s.next_seq {
                    return;
                }
                s.buffered.insert(*seq, value.clone());
                while let Some(v) = s.buffered.remove(&s.next_seq) {
                    s.next_seq += 1;
                    self.events.push_back(ClientEvent::StreamItem {
                        stream_id: *stream_id,
                        value: v,
                    });
                }
            }
            MessageBody::RpcRequest(req) => {
                if self.relayed_seen.insert(req.call_id) {
                    self.events.push_back(ClientEvent::Invoked {
                        method_id: req.method_id,
                        target: req.target,
                        args: req.args.clone(),
                    });
                }
            }
            _ => {}
        }
    }

    /// Fails calls whose deadline has passed.
    pub fn poll(&mut self, now_ms: f64) {
        let expired: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, d)| now_ms >= **d)
            .map(|(c, _)| *c)
            .collect();
        for call_id in expired {
            self.pending.remove(&call_id);
            self.events.push_back(ClientEvent::Completed {
                call_id,
                result: Err(CallFailure::Timeout),
            });
        }
    }

    pub fn next_deadline(&self) -> Option<f64> {
        self.pending.values().copied().min_by(f64::total_cmp)
    }

    pub fn events(&mut self) -> Vec<ClientEvent> {
        self.events.drain(..).collect()
    }
}
